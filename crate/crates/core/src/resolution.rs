//! Raising score-map resolution without touching weights.
//!
//! [`apply_surgery`] removes the last stride-2 downsampling sites and dilates
//! every later convolution to compensate (the hole / à trous algorithm).
//! [`stitched_forward`] computes exactly the same high-resolution scores with
//! the unmodified low-resolution network: it runs one pass per sub-stride
//! offset, moving the sampling grid of the removed sites, and interleaves the
//! pass outputs.

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::loss::{bootstrapped_ce, BootstrapConfig};
use crate::network::{backward, forward, Layer, Mode, NetworkSpec, OptState};
use crate::tensor::{ConvParams, Shape, Tensor};

/// Input-pixel extent spanned by a classifier kernel: `((k-1)*d + 1) * s`.
pub fn field_of_view(kernel: usize, dilation: usize, feature_stride: usize) -> usize {
    ((kernel - 1) * dilation + 1) * feature_stride
}

/// A downsampling site: a top-level layer whose main path has stride 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StrideSite {
    pub layer: usize,
}

/// Top-level layers that downsample, in execution order.
pub fn stride_sites(net: &NetworkSpec) -> Result<Vec<StrideSite>> {
    let mut sites = Vec::new();
    for (i, l) in net.layers.iter().enumerate() {
        match l {
            Layer::Conv(p) | Layer::Classifier(p) => {
                check_site_conv(p, i)?;
                if p.stride != (1, 1) {
                    sites.push(StrideSite { layer: i });
                }
            }
            Layer::Residual(b) => {
                let strided: Vec<&ConvParams> = b
                    .body
                    .iter()
                    .filter_map(|x| match x {
                        Layer::Conv(p) if p.stride != (1, 1) => Some(p),
                        _ => None,
                    })
                    .collect();
                match strided.as_slice() {
                    [] => {
                        if b.projection.as_ref().is_some_and(|p| p.stride != (1, 1)) {
                            return Err(Error::invalid(format!(
                                "residual block {i} has a strided projection but no strided body conv"
                            )));
                        }
                    }
                    [p] => {
                        check_site_conv(p, i)?;
                        if b.projection.as_ref().map(|q| q.stride) != Some(p.stride) {
                            return Err(Error::invalid(format!(
                                "residual block {i} downsamples without a matching strided projection"
                            )));
                        }
                        sites.push(StrideSite { layer: i });
                    }
                    _ => {
                        return Err(Error::invalid(format!(
                            "residual block {i} has more than one strided conv"
                        )))
                    }
                }
            }
            _ => {}
        }
    }
    Ok(sites)
}

fn check_site_conv(p: &ConvParams, layer: usize) -> Result<()> {
    if !matches!(p.stride, (1, 1) | (2, 2)) {
        return Err(Error::invalid(format!(
            "layer {layer} has stride {:?}; only strides 1 and 2 are supported",
            p.stride
        )));
    }
    Ok(())
}

fn log2_exact(v: usize) -> Option<u32> {
    (v.is_power_of_two()).then(|| v.trailing_zeros())
}

/// Per-layer edits produced by planning a stride-to-dilation conversion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SurgeryPlan {
    pub source_stride: usize,
    pub target_stride: usize,
    /// Top-level layers whose stride-2 downsampling is removed.
    pub removed_sites: Vec<usize>,
    /// Dilation (and padding) multiplier for each top-level layer's convs
    /// that run after a removed site, as `(layer, multiplier_before, multiplier_after)`:
    /// convs at or before a removed site's strided conv use the first value,
    /// later convs in the same block the second.
    pub multipliers: Vec<(usize, usize, usize)>,
}

pub fn plan_surgery(net: &NetworkSpec, target_stride: usize) -> Result<SurgeryPlan> {
    let source = net.output_stride;
    if target_stride == 0 || target_stride > source {
        return Err(Error::invalid(format!(
            "surgery target stride {target_stride} must lie in 1..={source}; surgery only raises resolution"
        )));
    }
    if source % target_stride != 0 {
        return Err(Error::invalid(format!(
            "target stride {target_stride} does not divide source stride {source}"
        )));
    }
    let Some(levels) = log2_exact(source / target_stride) else {
        return Err(Error::invalid(format!(
            "stride ratio {} is not a power of two",
            source / target_stride
        )));
    };
    let sites = stride_sites(net)?;
    if sites.len() < levels as usize {
        return Err(Error::invalid(format!(
            "network has {} downsampling sites, cannot remove {levels}",
            sites.len()
        )));
    }
    let removed: Vec<usize> = sites[sites.len() - levels as usize..].iter().map(|s| s.layer).collect();
    let mut m = 1;
    let mut multipliers = Vec::with_capacity(net.layers.len());
    for i in 0..net.layers.len() {
        let before = m;
        if removed.contains(&i) {
            m *= 2;
        }
        multipliers.push((i, before, m));
    }
    Ok(SurgeryPlan {
        source_stride: source,
        target_stride,
        removed_sites: removed,
        multipliers,
    })
}

fn dilate(p: &mut ConvParams, m: usize) {
    p.dilation = (p.dilation.0 * m, p.dilation.1 * m);
    p.padding = (p.padding.0 * m, p.padding.1 * m);
}

/// Applies a plan: parameter values are shared unchanged; only stride,
/// dilation and padding metadata differ.
pub fn apply_plan(net: &NetworkSpec, plan: &SurgeryPlan) -> Result<NetworkSpec> {
    if plan.source_stride != net.output_stride || plan.multipliers.len() != net.layers.len() {
        return Err(Error::invalid("surgery plan was made for a different network"));
    }
    let mut out = net.clone();
    for (layer, &(_, before, after)) in out.layers.iter_mut().zip(&plan.multipliers) {
        let removed = before != after;
        match layer {
            Layer::Conv(p) | Layer::Classifier(p) => {
                dilate(p, before);
                if removed {
                    p.stride = (1, 1);
                }
            }
            Layer::Residual(b) => {
                let mut m = before;
                for inner in &mut b.body {
                    if let Layer::Conv(p) = inner {
                        dilate(p, m);
                        if removed && p.stride != (1, 1) {
                            p.stride = (1, 1);
                            m = after;
                        }
                    }
                }
                if let Some(p) = &mut b.projection {
                    dilate(p, before);
                    if removed {
                        p.stride = (1, 1);
                    }
                }
            }
            _ => {}
        }
    }
    out.output_stride = plan.target_stride;
    out.validate()?;
    Ok(out)
}

/// Converts `net` to produce scores at `target_stride` by removing the last
/// downsampling sites and dilating everything after them.
pub fn apply_surgery(net: &NetworkSpec, target_stride: usize) -> Result<NetworkSpec> {
    let plan = plan_surgery(net, target_stride)?;
    apply_plan(net, &plan)
}

/// Shift-and-stitch setup for simulating stride `s / ratio` with a stride-`s`
/// network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StitchConfig {
    pub ratio: usize,
    /// `(dy, dx)` per pass: `{0..ratio-1}^2` in row-major order.
    pub offsets: Vec<(usize, usize)>,
    /// Earliest top-level layer whose downsampling the shifts emulate.
    pub boundary_layer: usize,
}

impl StitchConfig {
    pub fn new(net: &NetworkSpec, ratio: usize) -> Result<Self> {
        if ratio == 0 || net.output_stride % ratio != 0 {
            return Err(Error::invalid(format!(
                "stitch ratio {ratio} does not divide output stride {}",
                net.output_stride
            )));
        }
        let offsets = (0..ratio)
            .flat_map(|dy| (0..ratio).map(move |dx| (dy, dx)))
            .collect();
        let boundary_layer = if ratio == 1 {
            net.layers.len()
        } else {
            plan_surgery(net, net.output_stride / ratio)?.removed_sites[0]
        };
        Ok(StitchConfig {
            ratio,
            offsets,
            boundary_layer,
        })
    }

    pub fn passes(&self) -> usize {
        self.offsets.len()
    }

    fn validate(&self, net: &NetworkSpec) -> Result<Vec<usize>> {
        let r = self.ratio;
        if self.offsets.len() != r * r {
            return Err(Error::invalid(format!(
                "stitch ratio {r} needs {} offsets, got {}",
                r * r,
                self.offsets.len()
            )));
        }
        for (i, &(dy, dx)) in self.offsets.iter().enumerate() {
            if (dy, dx) != (i / r, i % r) {
                return Err(Error::invalid(format!(
                    "stitch offset {i} is {:?}, expected {:?}",
                    (dy, dx),
                    (i / r, i % r)
                )));
            }
        }
        if r == 1 {
            return Ok(Vec::new());
        }
        if net.output_stride % r != 0 {
            return Err(Error::invalid(format!(
                "stitch ratio {r} does not divide output stride {}",
                net.output_stride
            )));
        }
        let plan = plan_surgery(net, net.output_stride / r)?;
        if plan.removed_sites[0] != self.boundary_layer {
            return Err(Error::invalid(format!(
                "boundary layer {} does not match the first emulated downsampling site {}",
                self.boundary_layer, plan.removed_sites[0]
            )));
        }
        Ok(plan.removed_sites)
    }
}

fn set_site_offset(layer: &mut Layer, offset: (usize, usize)) {
    match layer {
        Layer::Conv(p) | Layer::Classifier(p) => p.offset = offset,
        Layer::Residual(b) => {
            for inner in &mut b.body {
                if let Layer::Conv(p) = inner {
                    if p.stride != (1, 1) {
                        p.offset = offset;
                    }
                }
            }
            if let Some(p) = &mut b.projection {
                p.offset = offset;
            }
        }
        _ => {}
    }
}

/// The low-resolution network as run for pass `(dy, dx)`.
///
/// The offset is split into binary digits, least significant at the earliest
/// emulated site, so each strided layer moves its sampling grid by at most
/// one input pixel. This keeps borders exact for ratios above 2.
fn pass_network(net: &NetworkSpec, sites: &[usize], offset: (usize, usize)) -> NetworkSpec {
    let mut pass = net.clone();
    for (level, &site) in sites.iter().enumerate() {
        let digit = ((offset.0 >> level) & 1, (offset.1 >> level) & 1);
        set_site_offset(&mut pass.layers[site], digit);
    }
    pass
}

fn stitched_extent(pass_sizes: &[usize], r: usize) -> Result<usize> {
    let total: usize = pass_sizes.iter().sum();
    for (d, &size) in pass_sizes.iter().enumerate() {
        let expect = if d >= total { 0 } else { (total - 1 - d) / r + 1 };
        if size != expect {
            return Err(Error::shape(format!(
                "pass sizes {pass_sizes:?} cannot be interleaved at ratio {r}"
            )));
        }
    }
    Ok(total)
}

fn interleave(outputs: &[Tensor], r: usize) -> Result<Tensor> {
    let heights: Vec<usize> = (0..r).map(|dy| outputs[dy * r].shape().h).collect();
    let widths: Vec<usize> = (0..r).map(|dx| outputs[dx].shape().w).collect();
    let h = stitched_extent(&heights, r)?;
    let w = stitched_extent(&widths, r)?;
    let first = outputs[0].shape();
    let mut out = Tensor::zeros(Shape::new(first.n, first.c, h, w));
    for (p, o) in outputs.iter().enumerate() {
        let (dy, dx) = (p / r, p % r);
        let s = o.shape();
        if s.h != heights[dy] || s.w != widths[dx] {
            return Err(Error::shape(format!("pass {p} produced inconsistent shape {s}")));
        }
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    for x in 0..s.w {
                        out.set(n, c, y * r + dy, x * r + dx, o.at(n, c, y, x));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// High-resolution scores computed with `ratio^2` passes of the unmodified
/// low-resolution network. `stitched[y, x]` comes from pass
/// `(y mod r, x mod r)` at position `(y div r, x div r)`.
pub fn stitched_forward(low_net: &NetworkSpec, input: &Tensor, cfg: &StitchConfig) -> Result<Tensor> {
    let sites = cfg.validate(low_net)?;
    if cfg.ratio == 1 {
        return forward(low_net, input, Mode::Eval).map(|(s, _)| s);
    }
    let outputs = cfg
        .offsets
        .iter()
        .map(|&off| forward(&pass_network(low_net, &sites, off), input, Mode::Eval).map(|(s, _)| s))
        .collect::<Result<Vec<_>>>()?;
    interleave(&outputs, cfg.ratio)
}

/// Loss statistics from one shifted pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PassLoss {
    pub offset: (usize, usize),
    /// `None` when every label in the pass was ignored.
    pub loss: Option<f64>,
    pub selected: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StitchStepReport {
    pub passes: Vec<PassLoss>,
}

impl StitchStepReport {
    /// Mean loss over passes that had valid pixels.
    pub fn mean_loss(&self) -> Option<f64> {
        let losses: Vec<f64> = self.passes.iter().filter_map(|p| p.loss).collect();
        (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
    }

    pub fn selected(&self) -> usize {
        self.passes.iter().map(|p| p.selected).sum()
    }
}

/// Runs every shifted pass, computing the loss against the label grid
/// `labels[dy + r*i, dx + r*j]` and accumulating each pass's gradient into
/// `opt`. Weights are not touched.
///
/// Passes whose labels are all ignored contribute nothing; if every pass is
/// empty the crop is rejected.
pub fn stitched_accumulate(
    low_net: &NetworkSpec,
    input: &Tensor,
    labels: &LabelMap,
    cfg: &StitchConfig,
    loss_cfg: &BootstrapConfig,
    opt: &mut OptState,
    mode: Mode,
) -> Result<StitchStepReport> {
    let sites = cfg.validate(low_net)?;
    let r = cfg.ratio;
    let mut passes = Vec::with_capacity(cfg.offsets.len());
    for &off in &cfg.offsets {
        let net = pass_network(low_net, &sites, off);
        let (scores, tape) = forward(&net, input, mode)?;
        let sub = labels.subsample(off, r);
        let s = scores.shape();
        if sub.dims() != (s.h, s.w) {
            return Err(Error::shape(format!(
                "pass {off:?}: labels subsample to {}x{} but scores are {}x{}",
                sub.height(),
                sub.width(),
                s.h,
                s.w
            )));
        }
        match bootstrapped_ce(&scores, &sub, loss_cfg) {
            Ok(res) => {
                let grads = backward(&net, &tape, &res.grad_scores)?;
                opt.accumulate(&grads)?;
                passes.push(PassLoss {
                    offset: off,
                    loss: Some(res.loss),
                    selected: res.selected_count,
                });
            }
            Err(Error::EmptyCrop) => passes.push(PassLoss {
                offset: off,
                loss: None,
                selected: 0,
            }),
            Err(e) => return Err(e),
        }
    }
    if passes.iter().all(|p| p.loss.is_none()) {
        return Err(Error::EmptyCrop);
    }
    Ok(StitchStepReport { passes })
}

/// All shifted passes followed by exactly one weight update.
pub fn stitched_train_step(
    low_net: &mut NetworkSpec,
    input: &Tensor,
    labels: &LabelMap,
    cfg: &StitchConfig,
    loss_cfg: &BootstrapConfig,
    opt: &mut OptState,
    mode: Mode,
) -> Result<StitchStepReport> {
    let report = stitched_accumulate(low_net, input, labels, cfg, loss_cfg, opt, mode)?;
    opt.sgd_step(low_net)?;
    Ok(report)
}

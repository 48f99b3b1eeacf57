use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::loss::{bootstrapped_ce, BootstrapConfig};
use crate::network::{
    backward, build_mini_fcrn, forward, random_tensor, FcrnConfig, Mode, NetworkSpec, OptState, SgdConfig,
};
use crate::resolution::{apply_surgery, field_of_view, stitched_accumulate, stitched_forward, StitchConfig};
use crate::tensor::{dropout_key, Shape, Tensor};

pub const STITCH_CHECK_TOLERANCE: f64 = 1e-5;

/// One line of the field-of-view table; `feature_stride` 16 means features
/// at 1/16 of the input resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FovRow {
    pub feature_stride: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub fov: usize,
}

impl FovRow {
    pub fn new(feature_stride: usize, kernel: usize, dilation: usize) -> Self {
        FovRow {
            feature_stride,
            kernel,
            dilation,
            fov: field_of_view(kernel, dilation, feature_stride),
        }
    }
}

/// The classifier settings compared in the published resolution and
/// kernel/dilation tables.
pub fn default_fov_rows() -> Vec<FovRow> {
    [
        (16, 3, 6),
        (8, 3, 6),
        (8, 3, 12),
        (8, 3, 18),
        (8, 5, 6),
        (8, 5, 12),
        (8, 7, 6),
        (8, 5, 18),
        (8, 7, 12),
    ]
    .iter()
    .map(|&(s, k, d)| FovRow::new(s, k, d))
    .collect()
}

/// Every combination of the given strides, kernels and dilations.
pub fn fov_grid(strides: &[usize], kernels: &[usize], dilations: &[usize]) -> Vec<FovRow> {
    let mut rows = Vec::new();
    for &s in strides {
        for &k in kernels {
            for &d in dilations {
                rows.push(FovRow::new(s, k, d));
            }
        }
    }
    rows
}

pub fn format_fov_table(rows: &[FovRow]) -> String {
    let mut out = format!("{:<10} {:>6} {:>8} {:>5}\n", "resolution", "kernel", "dilation", "fov");
    for r in rows {
        out.push_str(&format!(
            "{:<10} {:>6} {:>8} {:>5}\n",
            format!("1/{}", r.feature_stride),
            r.kernel,
            r.dilation,
            r.fov
        ));
    }
    out
}

/// Rows for the given axes, or the default table when all are empty.
pub fn cmd_fov_table(strides: &[usize], kernels: &[usize], dilations: &[usize]) -> Result<Vec<FovRow>> {
    if strides.is_empty() && kernels.is_empty() && dilations.is_empty() {
        return Ok(default_fov_rows());
    }
    let mut bad = Vec::new();
    for (name, v) in [("resolutions", strides), ("kernels", kernels), ("dilations", dilations)] {
        if v.is_empty() {
            bad.push(format!("{name}: give at least one value"));
        }
        if v.contains(&0) {
            bad.push(format!("{name}: values must be >= 1"));
        }
    }
    if !bad.is_empty() {
        return Err(Error::Config(bad));
    }
    Ok(fov_grid(strides, kernels, dilations))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StitchCheckReport {
    pub instances: usize,
    /// Largest `|stitched - surgery|` over all score entries.
    pub forward_max_abs: f64,
    /// Largest relative L2 error between the mean gradient of the shifted
    /// passes and the gradient of the converted network.
    pub gradient_max_rel: f64,
}

impl StitchCheckReport {
    pub fn to_text(&self) -> String {
        format!(
            "instances={}\nforward_max_abs={:.3e}\ngradient_max_rel={:.3e}\ntolerance={:.0e}\n",
            self.instances, self.forward_max_abs, self.gradient_max_rel, STITCH_CHECK_TOLERANCE
        )
    }
}

/// A random small FCRN (at most two residual blocks) with output stride 4
/// or 8, plus an input whose size is a multiple of that stride.
fn random_instance(seed: u64, i: u64) -> Result<(NetworkSpec, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_key(seed, 0xC4EC, i));
    let stages = rng.gen_range(1..=2usize);
    let os = if stages == 2 && rng.gen_bool(0.5) { 8 } else { 4 };
    let widths: Vec<usize> = (0..stages).map(|_| rng.gen_range(2..=5)).collect();
    let net = build_mini_fcrn(&FcrnConfig {
        blocks_per_stage: vec![1; stages],
        stage_widths: widths,
        num_classes: rng.gen_range(2..=4),
        classifier_kernel: [1, 3][rng.gen_range(0..2)],
        classifier_dilation: rng.gen_range(1..=3),
        output_stride: os,
        dropout_rate: 0.0,
        in_channels: 3,
        init_seed: rng.gen(),
    })?;
    let side = os * rng.gen_range(2..=48 / os);
    let input = random_tensor(Shape::new(1, 3, side, side), rng.gen());
    Ok((net, input))
}

/// Builds random small networks and compares ratio-2 shift-and-stitch with
/// the surgically converted network, both for scores and for gradients
/// (plain cross-entropy over all pixels). Fails with the offending value if
/// either exceeds [`STITCH_CHECK_TOLERANCE`].
pub fn cmd_stitch_check(seed: u64, instances: usize) -> Result<StitchCheckReport> {
    let mut forward_max_abs: f64 = 0.0;
    let mut gradient_max_rel: f64 = 0.0;
    for i in 0..instances as u64 {
        let (net, input) = random_instance(seed, i)?;
        let high = apply_surgery(&net, net.output_stride / 2)?;
        let cfg = StitchConfig::new(&net, 2)?;
        let stitched = stitched_forward(&net, &input, &cfg)?;
        let (direct, tape) = forward(&high, &input, Mode::Eval)?;
        forward_max_abs = forward_max_abs.max(stitched.max_abs_diff(&direct));

        let s = direct.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_key(seed, 0x1AB5, i));
        let data = (0..s.h * s.w).map(|_| rng.gen_range(0..s.c) as u8).collect();
        let labels = LabelMap::new(s.h, s.w, data)?;
        let loss = BootstrapConfig {
            threshold: 1.0,
            min_keep: s.h * s.w,
            ..BootstrapConfig::default()
        };
        let res = bootstrapped_ce(&direct, &labels, &loss)?;
        let reference = backward(&high, &tape, &res.grad_scores)?.flat();
        let mut opt = OptState::new(
            &net,
            SgdConfig {
                lr: 0.0,
                momentum: 0.0,
                weight_decay: 0.0,
            },
        );
        stitched_accumulate(&net, &input, &labels, &cfg, &loss, &mut opt, Mode::Eval)?;
        let mean = opt.mean_gradient().expect("passes accumulated").flat();
        let diff = mean.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = reference.iter().map(|b| b * b).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        gradient_max_rel = gradient_max_rel.max(diff / norm);
    }
    let report = StitchCheckReport {
        instances,
        forward_max_abs,
        gradient_max_rel,
    };
    if forward_max_abs.is_nan() || forward_max_abs >= STITCH_CHECK_TOLERANCE {
        return Err(Error::Tolerance(format!(
            "stitched scores deviate by {forward_max_abs:.3e}, tolerance {STITCH_CHECK_TOLERANCE:.0e}"
        )));
    }
    if gradient_max_rel.is_nan() || gradient_max_rel >= STITCH_CHECK_TOLERANCE {
        return Err(Error::Tolerance(format!(
            "stitched gradients deviate by {gradient_max_rel:.3e} (relative), tolerance {STITCH_CHECK_TOLERANCE:.0e}"
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_values() {
        let fovs: Vec<usize> = default_fov_rows().iter().map(|r| r.fov).collect();
        assert_eq!(fovs, vec![208, 104, 200, 296, 200, 392, 296, 584, 584]);
    }

    #[test]
    fn table_text_has_one_line_per_row() {
        let text = format_fov_table(&default_fov_rows());
        assert_eq!(text.lines().count(), 10);
        assert!(text.lines().nth(1).unwrap().starts_with("1/16"));
    }

    #[test]
    fn grid_covers_every_combination() {
        let rows = cmd_fov_table(&[8, 16], &[3], &[6, 12]).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(matches!(cmd_fov_table(&[8], &[], &[0]), Err(Error::Config(v)) if v.len() == 2));
    }

    #[test]
    fn stitch_check_passes() {
        let r = cmd_stitch_check(1, 3).unwrap();
        assert!(r.forward_max_abs < STITCH_CHECK_TOLERANCE);
        assert!(r.gradient_max_rel < STITCH_CHECK_TOLERANCE);
    }
}

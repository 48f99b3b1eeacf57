//! Online bootstrapping of hard pixels: softmax cross-entropy averaged only
//! over pixels whose true-class probability falls below a threshold, with a
//! floor on how many pixels are kept.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::tensor::{softmax_channel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    /// Pixels whose true-class probability is below this are hard; in `(0, 1]`.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Minimum pixels kept per mini-batch.
    #[serde(default = "default_min_keep")]
    pub min_keep: usize,
    #[serde(default = "default_ignore")]
    pub ignore_label: u8,
}

fn default_threshold() -> f64 {
    1.0
}

fn default_min_keep() -> usize {
    512
}

fn default_ignore() -> u8 {
    IGNORE_LABEL
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            threshold: 1.0,
            min_keep: 512,
            ignore_label: IGNORE_LABEL,
        }
    }
}

impl BootstrapConfig {
    /// Plain cross-entropy over every valid pixel.
    pub fn plain() -> Self {
        BootstrapConfig {
            threshold: 1.0,
            min_keep: 1,
            ignore_label: IGNORE_LABEL,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            bad.push(format!("loss.threshold: must lie in (0, 1], got {}", self.threshold));
        }
        if self.min_keep == 0 {
            bad.push("loss.min_keep: must be >= 1".to_string());
        }
        bad
    }

    fn validate(&self) -> Result<()> {
        let bad = self.problems();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(bad.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossResult {
    pub loss: f64,
    pub selected_count: usize,
    /// One flag per pixel, row-major over `(n, y, x)`.
    pub selection_mask: Vec<bool>,
    pub grad_scores: Tensor,
}

/// Hard-pixel selection over pooled pixels.
///
/// A valid pixel is selected when its true-class probability is below the
/// threshold. If that leaves fewer than `min(min_keep, #valid)` pixels, the
/// selection becomes that many pixels with the smallest probabilities, ties
/// going to the lower row-major index.
pub fn select_hard_pixels(p_true: &[f64], valid: &[bool], cfg: &BootstrapConfig) -> Result<Vec<bool>> {
    cfg.validate()?;
    if p_true.len() != valid.len() {
        return Err(Error::shape(format!(
            "{} probabilities but {} validity flags",
            p_true.len(),
            valid.len()
        )));
    }
    let valid_idx: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
    if valid_idx.is_empty() {
        return Err(Error::EmptyCrop);
    }
    let floor = cfg.min_keep.min(valid_idx.len());
    let mut mask = vec![false; p_true.len()];
    let mut hard = 0;
    for &i in &valid_idx {
        if p_true[i] < cfg.threshold {
            mask[i] = true;
            hard += 1;
        }
    }
    if hard >= floor {
        return Ok(mask);
    }
    let mut order = valid_idx;
    order.sort_by(|&a, &b| p_true[a].total_cmp(&p_true[b]).then(a.cmp(&b)));
    mask.fill(false);
    for &i in &order[..floor] {
        mask[i] = true;
    }
    Ok(mask)
}

/// `1 / sum_c exp(s_c - s_y)` with the terms summed in sorted order, so
/// pixels whose score vectors are permutations of each other get bit-equal
/// probabilities and the tie rule sees them as tied.
fn true_class_probability(scores: &Tensor, n: usize, y: usize, p: usize) -> f64 {
    let s = scores.shape();
    let (row, col) = (p / s.w, p % s.w);
    let sy = scores.at(n, y, row, col);
    let mut terms: Vec<f64> = (0..s.c).map(|c| (scores.at(n, c, row, col) - sy).exp()).collect();
    terms.sort_by(f64::total_cmp);
    1.0 / terms.iter().sum::<f64>()
}

/// Bootstrapped cross-entropy for a single crop.
pub fn bootstrapped_ce(scores: &Tensor, labels: &LabelMap, cfg: &BootstrapConfig) -> Result<LossResult> {
    bootstrapped_ce_batch(scores, std::slice::from_ref(labels), cfg)
}

/// Bootstrapped cross-entropy with pixels pooled across the batch before
/// selection; `min_keep` applies to the whole mini-batch.
pub fn bootstrapped_ce_batch(scores: &Tensor, labels: &[LabelMap], cfg: &BootstrapConfig) -> Result<LossResult> {
    cfg.validate()?;
    let s = scores.shape();
    if s.c < 2 {
        return Err(Error::shape(format!("need at least 2 classes, scores are {s}")));
    }
    if labels.len() != s.n {
        return Err(Error::shape(format!(
            "{} label maps for a batch of {}",
            labels.len(),
            s.n
        )));
    }
    for l in labels {
        if l.dims() != (s.h, s.w) {
            return Err(Error::shape(format!(
                "label map {}x{} does not match score grid {}x{}",
                l.height(),
                l.width(),
                s.h,
                s.w
            )));
        }
    }
    let k = s.c;
    let plane = s.plane();
    let probs = softmax_channel(scores);
    let mut p_true = vec![0.0; s.n * plane];
    let mut valid = vec![false; s.n * plane];
    for (n, map) in labels.iter().enumerate() {
        for (p, &y) in map.data().iter().enumerate() {
            if y == cfg.ignore_label {
                continue;
            }
            if y as usize >= k {
                return Err(Error::invalid(format!(
                    "label {y} out of range for {k} classes (ignore label is {})",
                    cfg.ignore_label
                )));
            }
            valid[n * plane + p] = true;
            p_true[n * plane + p] = true_class_probability(scores, n, y as usize, p);
        }
    }
    let mask = select_hard_pixels(&p_true, &valid, cfg)?;
    let selected = mask.iter().filter(|&&m| m).count();
    let inv = 1.0 / selected as f64;

    let mut grad = Tensor::zeros(s);
    let mut total = 0.0;
    let sd = scores.data();
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let n = i / plane;
        let p = i % plane;
        let y = labels[n].data()[p] as usize;
        let at = |c: usize| (n * k + c) * plane + p;
        let max = (0..k).map(|c| sd[at(c)]).fold(f64::NEG_INFINITY, f64::max);
        let lse = (0..k).map(|c| (sd[at(c)] - max).exp()).sum::<f64>().ln() + max;
        total += lse - sd[at(y)];
        let g = grad.data_mut();
        for c in 0..k {
            let pc = probs.data()[at(c)];
            g[at(c)] = (pc - if c == y { 1.0 } else { 0.0 }) * inv;
        }
    }
    Ok(LossResult {
        loss: total * inv,
        selected_count: selected,
        selection_mask: mask,
        grad_scores: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    /// Two-class scores whose class-0 probability is exactly `p` at each pixel.
    fn scores_with_p(ps: &[f64]) -> Tensor {
        let n = ps.len();
        let mut data = vec![0.0; 2 * n];
        for (i, &p) in ps.iter().enumerate() {
            data[i] = (p / (1.0 - p)).ln();
        }
        Tensor::from_vec(Shape::new(1, 2, 1, n), data).unwrap()
    }

    fn cfg(t: f64, k: usize) -> BootstrapConfig {
        BootstrapConfig {
            threshold: t,
            min_keep: k,
            ignore_label: 255,
        }
    }

    #[test]
    fn threshold_selects_hard_pixels() {
        let scores = scores_with_p(&[0.9, 0.6, 0.4, 0.2]);
        let labels = LabelMap::filled(1, 4, 0);
        let r = bootstrapped_ce(&scores, &labels, &cfg(0.5, 1)).unwrap();
        assert_eq!(r.selection_mask, vec![false, false, true, true]);
        let expect = -(0.4f64.ln() + 0.2f64.ln()) / 2.0;
        assert!((r.loss - expect).abs() < 1e-12);
        assert!((r.loss - 1.26286).abs() < 1e-5);
    }

    #[test]
    fn floor_keeps_hardest_when_threshold_selects_none() {
        let scores = scores_with_p(&[0.9, 0.6, 0.4, 0.2]);
        let labels = LabelMap::filled(1, 4, 0);
        let r = bootstrapped_ce(&scores, &labels, &cfg(0.1, 3)).unwrap();
        assert_eq!(r.selection_mask, vec![false, true, true, true]);
        let expect = -(0.2f64.ln() + 0.4f64.ln() + 0.6f64.ln()) / 3.0;
        assert!((r.loss - expect).abs() < 1e-12);
    }

    #[test]
    fn threshold_one_is_plain_cross_entropy() {
        let ps = [0.9, 0.6, 0.4, 0.2, 0.75];
        let scores = scores_with_p(&ps);
        let labels = LabelMap::filled(1, 5, 0);
        let r = bootstrapped_ce(&scores, &labels, &BootstrapConfig::plain()).unwrap();
        let expect = -ps.iter().map(|p| p.ln()).sum::<f64>() / 5.0;
        assert_eq!(r.selected_count, 5);
        assert!((r.loss - expect).abs() < 1e-12);
    }

    #[test]
    fn floor_clamps_to_valid_count() {
        let mask = select_hard_pixels(&[0.9, 0.8, 0.7], &[true, false, true], &cfg(0.1, 10)).unwrap();
        assert_eq!(mask, vec![true, false, true]);
    }

    #[test]
    fn ties_break_by_lowest_index() {
        let mask = select_hard_pixels(&[0.5, 0.3, 0.5, 0.5], &[true; 4], &cfg(0.1, 2)).unwrap();
        assert_eq!(mask, vec![true, true, false, false]);
    }

    #[test]
    fn all_ignored_is_an_empty_crop() {
        let scores = scores_with_p(&[0.5, 0.5]);
        let labels = LabelMap::filled(1, 2, 255);
        assert!(matches!(
            bootstrapped_ce(&scores, &labels, &cfg(0.5, 1)),
            Err(Error::EmptyCrop)
        ));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let scores = scores_with_p(&[0.5, 0.5]);
        let labels = LabelMap::new(1, 2, vec![0, 2]).unwrap();
        assert!(matches!(
            bootstrapped_ce(&scores, &labels, &cfg(0.5, 1)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn ignored_pixels_get_no_gradient() {
        let scores = scores_with_p(&[0.3, 0.4, 0.5]);
        let labels = LabelMap::new(1, 3, vec![0, 255, 1]).unwrap();
        let r = bootstrapped_ce(&scores, &labels, &cfg(1.0, 1)).unwrap();
        assert_eq!(r.selection_mask, vec![true, false, true]);
        assert_eq!(r.grad_scores.at(0, 0, 0, 1), 0.0);
        assert_eq!(r.grad_scores.at(0, 1, 0, 1), 0.0);
    }

    #[test]
    fn permuted_scores_tie_exactly() {
        let a = [0.3, -1.7, 2.2, 0.9];
        let b = [2.2, 0.9, 0.3, -1.7];
        let scores = Tensor::from_fn(Shape::new(1, 4, 1, 2), |_, c, _, x| if x == 0 { a[c] } else { b[c] });
        let labels = LabelMap::new(1, 2, vec![1, 3]).unwrap();
        let r = bootstrapped_ce(&scores, &labels, &cfg(0.01, 1)).unwrap();
        assert_eq!(r.selection_mask, vec![true, false]);
    }

    #[test]
    fn bad_config_rejected() {
        assert_eq!(cfg(0.0, 0).problems().len(), 2);
        assert_eq!(cfg(1.5, 1).problems().len(), 1);
        assert!(cfg(1.0, 1).problems().is_empty());
    }
}

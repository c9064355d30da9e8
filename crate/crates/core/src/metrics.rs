//! Reconstruction metrics outside the edit region and label accuracy inside it.

use crate::classifier::{estimate_map, ClassifierBank};
use crate::error::{shape_err, Error, Result};
use crate::segmap::{RoiMask, SegMap};
use crate::tensor::Tensor;
use crate::unet::DiffusionModel;

/// Reported PSNR when the compared pixels are identical.
pub const PSNR_CAP: f64 = 99.0;

/// Peak-to-peak range of model-space images.
pub const PEAK: f64 = 2.0;

/// Seed of the noise used when re-estimating maps for `accuracy_inside`.
pub const EVAL_SEED: u64 = 0x5eed_0fac;

fn check(x: &Tensor, y: &Tensor, m: &RoiMask) -> Result<(usize, usize)> {
    let s = x.shape();
    if !x.same_shape(y) || s.len() != 4 || s[0] != 1 {
        return shape_err("metric", format!("{:?} vs {:?}", x.shape(), y.shape()));
    }
    if s[2] != m.height() || s[3] != m.width() {
        return shape_err(
            "metric",
            format!("image {:?} vs mask {}x{}", s, m.height(), m.width()),
        );
    }
    if m.count() == m.bits().len() {
        return Err(Error::InvalidArgument(
            "mask leaves no outside pixels".into(),
        ));
    }
    Ok((s[1], s[2] * s[3]))
}

/// Per-value differences over unmasked pixels, all channels.
fn outside_diffs<'a>(
    x: &'a Tensor,
    y: &'a Tensor,
    m: &'a RoiMask,
    hw: usize,
) -> impl Iterator<Item = f64> + 'a {
    x.data()
        .iter()
        .zip(y.data())
        .enumerate()
        .filter(move |(i, _)| !m.bits()[i % hw])
        .map(|(_, (a, b))| a - b)
}

/// Mean absolute error over pixels with `m = 0` (model-space units; multiply
/// by 10³ for reporting).
pub fn mae_outside(x: &Tensor, x_edit: &Tensor, m: &RoiMask) -> Result<f64> {
    let (_, hw) = check(x, x_edit, m)?;
    let (sum, n) =
        outside_diffs(x, x_edit, m, hw).fold((0.0, 0usize), |(s, n), d| (s + d.abs(), n + 1));
    Ok(sum / n as f64)
}

/// PSNR over pixels with `m = 0`, peak = [`PEAK`], capped at [`PSNR_CAP`].
pub fn psnr_outside(x: &Tensor, x_edit: &Tensor, m: &RoiMask) -> Result<f64> {
    let (_, hw) = check(x, x_edit, m)?;
    let (sum, n) =
        outside_diffs(x, x_edit, m, hw).fold((0.0, 0usize), |(s, n), d| (s + d * d, n + 1));
    Ok(psnr_from_mse(sum / n as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (PEAK * PEAK / mse).log10()).min(PSNR_CAP)
}

/// PSNR over the whole image.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    if !x.same_shape(y) || x.is_empty() {
        return shape_err("psnr", format!("{:?} vs {:?}", x.shape(), y.shape()));
    }
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    Ok(psnr_from_mse(mse))
}

/// Fraction of ROI pixels where `pred` agrees with `target`.
pub fn roi_accuracy(pred: &SegMap, target: &SegMap, m: &RoiMask) -> Result<f64> {
    if !pred.same_dims(target) || pred.height() != m.height() || pred.width() != m.width() {
        return shape_err("roi_accuracy", "map and mask dimensions differ");
    }
    roi_label_accuracy(pred.labels(), target.labels(), m)
}

pub fn roi_label_accuracy(pred: &[u8], target: &[u8], m: &RoiMask) -> Result<f64> {
    let n = m.count();
    if n == 0 {
        return Err(Error::EmptyRoi);
    }
    let hit = m
        .bits()
        .iter()
        .zip(pred.iter().zip(target))
        .filter(|(&b, (p, t))| b && p == t)
        .count();
    Ok(hit as f64 / n as f64)
}

/// Re-estimates the map of `x_edit` with `G_multi` (fixed noise seed) and
/// scores it against `y_edited` inside the ROI.
pub fn accuracy_inside(
    x_edit: &Tensor,
    y_edited: &SegMap,
    m: &RoiMask,
    model: &DiffusionModel,
    bank: &ClassifierBank,
) -> Result<f64> {
    if m.count() == 0 {
        return Err(Error::EmptyRoi);
    }
    let pred = estimate_map(model, bank, x_edit, EVAL_SEED)?;
    roi_accuracy(&pred, y_edited, m)
}

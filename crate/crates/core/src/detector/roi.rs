//! Value-level ROI-align over a [`FeatureMap`].

use crate::geometry::BBox;
use crate::tape::roi_align_plan;

use super::FeatureMap;

/// Pools `roi` (pixel coordinates) into `[C, out_size, out_size]` by bilinear
/// sampling at `sampling x sampling` regular points per bin. Returns `None`
/// for ROIs smaller than one square pixel.
pub fn roi_align(
    feat: &FeatureMap,
    roi: &BBox,
    out_size: usize,
    sampling: usize,
) -> Option<Vec<f64>> {
    if !(roi.area() >= 1.0) {
        log::warn!("skipping degenerate ROI {roi:?}");
        return None;
    }
    let (c, h, w) = (feat.channels(), feat.height(), feat.width());
    let plan = roi_align_plan(roi, h, w, 1.0 / feat.stride as f64, out_size, sampling);
    let bins = out_size * out_size;
    let mut out = vec![0.0; c * bins];
    for ch in 0..c {
        let plane = &feat.values.data[ch * h * w..(ch + 1) * h * w];
        for (b, taps) in plan.bins.iter().enumerate() {
            out[ch * bins + b] = taps.iter().map(|&(i, wt)| wt * plane[i]).sum();
        }
    }
    Some(out)
}

//! Layout-invariant masks from instance-segmentation agreement between new
//! captures and renders of the previous-step field at the same poses.

use crate::camera::CameraView;
use crate::img::{ImageRgb, LabelImage, MaskImage};
use crate::raster::{render, RenderOptions};
use crate::scene::FieldSnapshot;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChangeError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("segmentation provider failed: {0}")]
    Provider(String),
}

/// Instance labels over an image; label 0 is unlabeled background and labels
/// run contiguously from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub labels: LabelImage,
    pub count: u32,
}

impl InstanceMask {
    pub fn from_labels(labels: LabelImage) -> Self {
        // Relabel to contiguous 1..count in first-appearance order.
        let mut map: HashMap<u32, u32> = HashMap::new();
        let mut next = 1u32;
        let mut out = LabelImage::new(labels.width, labels.height);
        for (i, &l) in labels.data.iter().enumerate() {
            if l == 0 {
                continue;
            }
            let id = *map.entry(l).or_insert_with(|| {
                let id = next;
                next += 1;
                id
            });
            out.data[i] = id;
        }
        Self { labels: out, count: next - 1 }
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }

    pub fn height(&self) -> usize {
        self.labels.height
    }
}

/// What the segmenter gets to look at. Renders of a field whose primitives
/// carry object ids also carry an oracle label sidecar; a learned
/// image-only segmenter simply ignores it.
pub struct SegmentationInput<'a> {
    pub image: &'a ImageRgb,
    /// Per-pixel argmax-contribution labels when the image came from a
    /// render with object-id provenance.
    pub render_labels: Option<&'a LabelImage>,
}

/// Pluggable instance segmentation. Implementations must be deterministic
/// for identical input.
pub trait SegmentationProvider {
    fn segment(&self, input: &SegmentationInput<'_>) -> Result<InstanceMask, ChangeError>;
}

/// One matched (or unmatched) instance pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceMatch {
    pub label_a: Option<u32>,
    pub label_b: Option<u32>,
    pub iou: f64,
}

/// Greedy maximum-IoU one-to-one matching between two label images.
/// Unmatched labels are reported with IoU 0; ties break toward smaller ids.
pub fn match_instances(a: &InstanceMask, b: &InstanceMask) -> Result<Vec<InstanceMatch>, ChangeError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(ChangeError::DimensionMismatch(a.width(), a.height(), b.width(), b.height()));
    }
    let mut area_a: HashMap<u32, usize> = HashMap::new();
    let mut area_b: HashMap<u32, usize> = HashMap::new();
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    for (&la, &lb) in a.labels.data.iter().zip(&b.labels.data) {
        if la > 0 {
            *area_a.entry(la).or_default() += 1;
        }
        if lb > 0 {
            *area_b.entry(lb).or_default() += 1;
        }
        if la > 0 && lb > 0 {
            *inter.entry((la, lb)).or_default() += 1;
        }
    }
    let mut candidates: Vec<(u32, u32, f64)> = inter
        .iter()
        .map(|(&(la, lb), &i)| {
            let union = area_a[&la] + area_b[&lb] - i;
            (la, lb, i as f64 / union as f64)
        })
        .collect();
    candidates.sort_by(|x, y| {
        y.2.total_cmp(&x.2).then_with(|| x.0.cmp(&y.0)).then_with(|| x.1.cmp(&y.1))
    });

    let mut used_a = vec![false; a.count as usize + 1];
    let mut used_b = vec![false; b.count as usize + 1];
    let mut matches = Vec::new();
    for (la, lb, iou) in candidates {
        if used_a[la as usize] || used_b[lb as usize] {
            continue;
        }
        used_a[la as usize] = true;
        used_b[lb as usize] = true;
        matches.push(InstanceMatch { label_a: Some(la), label_b: Some(lb), iou });
    }
    for la in 1..=a.count {
        if !used_a[la as usize] {
            matches.push(InstanceMatch { label_a: Some(la), label_b: None, iou: 0.0 });
        }
    }
    for lb in 1..=b.count {
        if !used_b[lb as usize] {
            matches.push(InstanceMatch { label_a: None, label_b: Some(lb), iou: 0.0 });
        }
    }
    Ok(matches)
}

/// Pixels that belong, in both masks, to an instance pair matched with
/// IoU >= threshold. Unlabeled background counts as one implicit instance
/// with its own IoU test. The result is the intersection of the two
/// per-frame masks.
pub fn layout_invariant_mask(
    current: &InstanceMask,
    previous: &InstanceMask,
    iou_threshold: f64,
) -> Result<MaskImage, ChangeError> {
    let matches = match_instances(current, previous)?;
    let (w, h) = (current.width(), current.height());

    // Matched pairs above threshold, as a lookup from current-frame label to
    // previous-frame label.
    let mut pair_of: HashMap<u32, u32> = HashMap::new();
    for m in &matches {
        if let (Some(la), Some(lb)) = (m.label_a, m.label_b) {
            if m.iou >= iou_threshold {
                pair_of.insert(la, lb);
            }
        }
    }

    // Background IoU.
    let mut bg_a = 0usize;
    let mut bg_b = 0usize;
    let mut bg_i = 0usize;
    for (&la, &lb) in current.labels.data.iter().zip(&previous.labels.data) {
        if la == 0 {
            bg_a += 1;
        }
        if lb == 0 {
            bg_b += 1;
        }
        if la == 0 && lb == 0 {
            bg_i += 1;
        }
    }
    let bg_union = bg_a + bg_b - bg_i;
    let bg_ok = bg_union == 0 || (bg_i as f64 / bg_union as f64) >= iou_threshold;

    let mut mask = MaskImage::new(w, h, false);
    for i in 0..w * h {
        let la = current.labels.data[i];
        let lb = previous.labels.data[i];
        let keep = if la == 0 || lb == 0 {
            bg_ok && la == 0 && lb == 0
        } else {
            pair_of.get(&la) == Some(&lb)
        };
        mask.data[i] = keep;
    }
    Ok(mask)
}

/// Per-view layout-invariant masks for the new captures at step t: render
/// the previous-step field at each new pose, segment both frames, and take
/// the agreement mask. A provider failure yields an all-zero mask for that
/// view (conservatively excluded from appearance supervision) and a logged
/// warning.
pub fn compute_masks(
    previous: &FieldSnapshot<'_>,
    views: &[(ImageRgb, CameraView)],
    provider: &dyn SegmentationProvider,
    iou_threshold: f64,
    opts: &RenderOptions,
) -> Vec<MaskImage> {
    views
        .iter()
        .enumerate()
        .map(|(vi, (image, cam))| {
            let rendered = render(previous, cam, opts);
            let labels = oracle_labels(previous, &rendered);
            let seg_new = provider.segment(&SegmentationInput { image, render_labels: None });
            let seg_prev = provider.segment(&SegmentationInput {
                image: &rendered.color,
                render_labels: labels.as_ref(),
            });
            match (seg_new, seg_prev) {
                (Ok(a), Ok(b)) => layout_invariant_mask(&a, &b, iou_threshold)
                    .unwrap_or_else(|e| {
                        log::warn!("view {vi}: mask computation failed ({e}); excluding view");
                        MaskImage::new(image.width, image.height, false)
                    }),
                (ra, rb) => {
                    let err = ra.err().or(rb.err()).expect("one side failed");
                    log::warn!("view {vi}: segmentation failed ({err}); excluding view");
                    MaskImage::new(image.width, image.height, false)
                }
            }
        })
        .collect()
}

/// Argmax-contribution object labels for a render of a field whose
/// primitives carry object ids; `None` when they do not.
pub fn oracle_labels(
    snapshot: &FieldSnapshot<'_>,
    out: &crate::raster::RenderOutput,
) -> Option<LabelImage> {
    let prims = &snapshot.field.primitives;
    if !prims.iter().any(|p| p.object_id.is_some()) {
        return None;
    }
    let mut labels = LabelImage::new(out.width, out.height);
    for (i, &p) in out.argmax_prim.iter().enumerate() {
        if p != crate::raster::NO_PRIM {
            labels.data[i] = prims[p as usize].object_id.unwrap_or(0);
        }
    }
    Some(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> InstanceMask {
        let h = rows.len();
        let w = rows[0].len();
        let mut labels = LabelImage::new(w, h);
        for (y, row) in rows.iter().enumerate() {
            for (x, ch) in row.chars().enumerate() {
                labels.set(x, y, ch.to_digit(10).unwrap());
            }
        }
        InstanceMask::from_labels(labels)
    }

    #[test]
    fn identical_masks_match_with_iou_one() {
        let a = mask_from(&["1100", "1100", "0022", "0022"]);
        let matches = match_instances(&a, &a).unwrap();
        assert_eq!(matches.len(), 2);
        for m in matches {
            assert_eq!(m.label_a, m.label_b);
            assert_eq!(m.iou, 1.0);
        }
    }

    #[test]
    fn disjoint_instances_do_not_match() {
        let a = mask_from(&["1100", "0000"]);
        let b = mask_from(&["0000", "0011"]);
        let matches = match_instances(&a, &b).unwrap();
        assert!(matches.iter().all(|m| m.iou == 0.0));
        assert!(matches.iter().any(|m| m.label_a == Some(1) && m.label_b.is_none()));
        assert!(matches.iter().any(|m| m.label_b == Some(1) && m.label_a.is_none()));
    }

    #[test]
    fn partial_overlap_iou_pixel_count() {
        // Two 50-pixel instances overlapping on 30 pixels: IoU = 30/70 = 3/7.
        let mut la = LabelImage::new(10, 10);
        let mut lb = LabelImage::new(10, 10);
        for i in 0..50 {
            la.data[i] = 1;
        }
        for i in 20..70 {
            lb.data[i] = 1;
        }
        let a = InstanceMask::from_labels(la);
        let b = InstanceMask::from_labels(lb);
        let matches = match_instances(&a, &b).unwrap();
        let m = matches.iter().find(|m| m.label_a == Some(1)).unwrap();
        assert_eq!(m.label_b, Some(1));
        assert!((m.iou - 3.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let a = mask_from(&["10", "01"]);
        let b = mask_from(&["100", "010"]);
        assert!(matches!(match_instances(&a, &b), Err(ChangeError::DimensionMismatch(..))));
    }

    #[test]
    fn identical_segmentations_keep_all_pixels() {
        let a = mask_from(&["1100", "1100", "0022", "0022"]);
        let m = layout_invariant_mask(&a, &a, 0.8).unwrap();
        assert_eq!(m.count_set(), 16); // labeled + agreeing background
    }

    #[test]
    fn instance_present_only_now_is_excluded() {
        let now = mask_from(&["1111", "0000", "0022", "0022"]);
        let prev = mask_from(&["1111", "0000", "0000", "0000"]);
        let m = layout_invariant_mask(&now, &prev, 0.8).unwrap();
        // Instance 2 exists only now: its pixels excluded.
        for y in 2..4 {
            for x in 2..4 {
                assert!(!m.get(x, y));
            }
        }
        // Shared instance 1 kept.
        for x in 0..4 {
            assert!(m.get(x, 0));
        }
        // Background differs under instance 2, but elsewhere agrees; the
        // background IoU (4/8 = 0.5) fails the 0.8 bar so background is out.
        assert!(!m.get(0, 1));
    }

    #[test]
    fn moved_object_excluded_on_both_sides() {
        let now = mask_from(&["1000", "0000", "0022", "0022"]);
        let prev = mask_from(&["1022", "0022", "0000", "0000"]);
        // Instance 2 moved: IoU 0 between its two placements.
        let m = layout_invariant_mask(&now, &prev, 0.5).unwrap();
        for (x, y) in [(2, 0), (3, 0), (2, 1), (3, 1), (2, 2), (3, 2), (2, 3), (3, 3)] {
            assert!(!m.get(x, y), "moved-object pixel ({x},{y}) must be excluded");
        }
        assert!(m.get(0, 0)); // static instance kept
    }

    #[test]
    fn threshold_monotonicity() {
        let now = mask_from(&["1100", "1100", "0022", "0022"]);
        let prev = mask_from(&["1110", "1100", "0022", "0222"]);
        let mut last = usize::MAX;
        for thr in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let m = layout_invariant_mask(&now, &prev, thr).unwrap();
            let n = m.count_set();
            assert!(n <= last, "raising the threshold must never add pixels");
            last = n;
        }
    }

    #[test]
    fn mask_is_subset_of_both_frames_agreement() {
        let now = mask_from(&["1100", "1100", "0022", "0022"]);
        let prev = mask_from(&["1100", "1000", "0022", "0022"]);
        let m = layout_invariant_mask(&now, &prev, 0.5).unwrap();
        for i in 0..16 {
            if m.data[i] {
                let la = now.labels.data[i];
                let lb = prev.labels.data[i];
                // Either both labeled (a matched pair) or both background.
                assert_eq!(la == 0, lb == 0);
            }
        }
    }
}
